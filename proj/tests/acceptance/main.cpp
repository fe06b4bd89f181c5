// One PASS/FAIL line per acceptance criterion. Exit code is nonzero when
// any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "answer_corpus.hpp"
#include "attn_distill/attnmap.hpp"
#include "attn_distill/errors.hpp"
#include "attn_distill/evaluator.hpp"
#include "attn_distill/llm_labeler.hpp"
#include "attn_distill/model.hpp"
#include "attn_distill/pipeline.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace attn_distill;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run(const std::string& name, double budget_s, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome out;
  try {
    out = body();
  } catch (const std::exception& e) {
    out = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (secs > budget_s) {
    out.pass = false;
    out.detail += " (over time budget)";
  }
  if (!out.pass) ++failures;
  std::printf("%s %s [%.2f s / %.0f s] %s\n", out.pass ? "PASS" : "FAIL", name.c_str(), secs, budget_s,
              out.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Image random_image(int size, Rng& rng) {
  Image img(size, size);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

Outcome shape_contract() {
  ModelConfig cfg;  // default widths, C = 512
  Rng rng(1);
  const auto params = ClassifierParams::init(cfg, rng);
  const auto img = random_image(kPatchPx, rng);
  const auto t0 = std::chrono::steady_clock::now();
  const auto grid = encode(img, params);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool shape = grid.rows == 6 && grid.cols == 6 && grid.size() == 36 && grid.tokens.rows() == 36 &&
                     grid.tokens.cols() == 512 && grid.active_count() == 36;
  return {shape && secs < 1.0,
          fmt("grid %.0fx%.0f C=%.0f", grid.rows, grid.cols, static_cast<double>(grid.tokens.cols())) +
              fmt(", encode %.3f s", secs)};
}

Outcome attention_normalization() {
  Rng rng(2);
  double worst = 0.0;
  bool ok = true;
  for (int i = 0; i < 1000; ++i) {
    const int c = 1 + static_cast<int>(rng.uniform_int(16));
    const int rows = 1 + static_cast<int>(rng.uniform_int(6));
    const int cols = 1 + static_cast<int>(rng.uniform_int(6));
    const double scale = rng.uniform(0.1, 3.0);
    const auto params = test_support::random_attention(c, rows * cols, rng, scale);
    const auto grid = test_support::random_grid(rows, cols, c, rng);
    const auto res = cross_attention(grid, params);
    double sum = 0.0;
    for (int t = 0; t < grid.size(); ++t) {
      const double w = res.weights[t];
      if (!(w >= 0.0 && w <= 1.0)) ok = false;
      if (!grid.active[t] && w != 0.0) ok = false;
      sum += w;
    }
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  return {ok && worst <= 1e-5, fmt("worst |sum-1| = %.3g", worst)};
}

Outcome drop_expectation() {
  Rng rng(3);
  constexpr int kTrials = 100000;
  const auto grid = test_support::random_grid(6, 6, 4, rng);
  double mean = 0.0;
  for (int i = 0; i < kTrials; ++i) mean += drop_tokens(grid, 0.2, rng, true).grid.tokens.sum();
  mean /= kTrials;
  const double original = grid.tokens.sum();
  const double rel = std::abs(mean - original) / std::abs(original);

  bool identity = true;
  for (int i = 0; i < 100; ++i) {
    const auto g = test_support::random_grid(6, 6, 4, rng);
    const auto d = drop_tokens(g, 0.0, rng, true);
    identity = identity && d.scale == 1.0 && d.grid.active == g.active && d.grid.tokens == g.tokens;
    const auto e = drop_tokens(g, 0.2, rng, false);
    identity = identity && e.grid.active == g.active && e.grid.tokens == g.tokens;
  }
  return {rel <= 0.01 && identity,
          fmt("relative deviation %.4f", rel) + (identity ? ", p=0 identity" : ", p=0 NOT identity")};
}

Outcome gradient_check() {
  Rng rng(4);
  double worst = 0.0;
  int bad = 0, compared = 0;
  for (int i = 0; i < 100; ++i) {
    const auto r = test_support::check_attention_gradients(8, 2, 2, rng, 1e-3);
    worst = std::max(worst, r.worst);
    compared += r.compared;
    if (!r.ok) ++bad;
  }
  return {bad == 0, fmt("%.0f values, worst relative %.3g, failing configs %.0f", compared, worst, bad)};
}

Outcome extraction_coverage() {
  Rng rng(5);
  int bad = 0;
  for (int i = 0; i < 100; ++i) {
    ModelConfig cfg;
    cfg.encoder_widths = {2, 2, 3, 3, 4, 4};
    Rng init = rng.derive(i);
    const auto params = ClassifierParams::init(cfg, init);
    PatchImage patch{{"s", 0, 0}, random_image(kPatchPx, rng)};
    ExtractionTrace trace;
    const auto map = extract_map(patch, params, ClassName::Wood, &trace);
    const int l = cfg.token_count();
    std::vector<int> seen(l, 0);
    for (int idx : trace.order) ++seen[idx];
    bool ok = static_cast<int>(trace.order.size()) == l && trace.forward_passes == l &&
              static_cast<int>(map.weights.size()) == l && trace.recorded.back() == 1.0;
    for (int k = 0; k < l; ++k) ok = ok && seen[k] == 1;
    for (int it = 0; it < l; ++it) ok = ok && map.weights[trace.order[it]] == trace.recorded[it];
    if (!ok) ++bad;
  }
  return {bad == 0, fmt("%.0f of 100 maps violated coverage", bad)};
}

Outcome metric_oracle() {
  Rng rng(6);
  int bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const int tile = 1 + static_cast<int>(rng.uniform_int(8));
    const int rows = 1 + static_cast<int>(rng.uniform_int(6));
    const int cols = 1 + static_cast<int>(rng.uniform_int(6));
    const double density = rng.uniform();
    BoolGrid mask(rows * tile, cols * tile);
    for (auto& c : mask.cells) c = rng.uniform() < density * 0.2;
    const auto down = downsample_gt(mask, tile);
    if (!(down == test_support::brute_downsample(mask, tile))) ++bad;

    AttentionMap map;
    map.rows = rows;
    map.cols = cols;
    map.token_pixels = tile;
    for (int k = 0; k < rows * cols; ++k) map.weights.push_back(rng.uniform());
    const auto up = upsample_attention(map, tile);
    if (up.values != test_support::brute_upsample(map, tile)) ++bad;

    const double sigma = rng.uniform(0.05, 0.95);
    BoolGrid pred(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) pred.set(r, c, map.at(r, c) > sigma);
    if (!(binarize(as_raster(map), sigma) == pred)) ++bad;
    const auto got = score(pred, down);
    const auto want = test_support::brute_score(pred, down);
    if (got.counts.tp != want.tp || got.counts.fp != want.fp || got.counts.fn != want.fn ||
        got.counts.tn != want.tn || got.iou != want.iou || got.precision != want.precision ||
        got.recall != want.recall)
      ++bad;
  }
  BoolGrid single(64, 64);
  single.set(63, 0, true);
  const auto d = downsample_gt(single, 64);
  const bool single_ok = d.rows == 1 && d.cols == 1 && d.at(0, 0);
  return {bad == 0 && single_ok,
          fmt("%.0f mismatches over 1000 grids", bad) + (single_ok ? ", single-pixel tile is foreground"
                                                                   : ", single-pixel tile NOT foreground")};
}

bool recall_non_increasing(const std::vector<EvalReport>& reports, std::string& where) {
  for (auto mode : {AlignMode::DownSampled, AlignMode::UpSampled}) {
    double prev_sigma = -1.0, prev_recall = 2.0;
    for (const auto& r : reports) {
      if (r.mode != mode) continue;
      if (r.threshold <= prev_sigma) {
        where = "thresholds not ascending";
        return false;
      }
      if (r.recall > prev_recall) {
        where = std::string(to_string(mode)) + fmt(" recall rises at sigma %.2f", r.threshold);
        return false;
      }
      prev_sigma = r.threshold;
      prev_recall = r.recall;
    }
  }
  return true;
}

Outcome threshold_monotonicity() {
  Rng rng(7);
  const auto thresholds = parse_thresholds("0.05:0.95:0.05");
  for (int i = 0; i < 200; ++i) {
    const int rows = 2 + static_cast<int>(rng.uniform_int(4));
    const int cols = 2 + static_cast<int>(rng.uniform_int(4));
    constexpr int tile = 8, token = 4;
    const int per = tile / token;
    GroundTruthMask gt{"s", ClassName::Wood, BoolGrid(rows * tile, cols * tile)};
    for (auto& c : gt.mask.cells) c = rng.uniform() < 0.1;
    std::vector<AttentionMap> maps;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        AttentionMap m;
        m.patch = {"s", r, c};
        m.rows = m.cols = per;
        m.token_pixels = token;
        for (int k = 0; k < per * per; ++k) m.weights.push_back(rng.uniform());
        maps.push_back(m);
      }
    }
    std::map<SheetId, GroundTruthMask> masks{{"s", gt}};
    const auto reports = sweep(maps, masks, ClassName::Wood, thresholds);
    std::string where;
    if (reports.size() != 2 * thresholds.size() || !recall_non_increasing(reports, where))
      return {false, fmt("sweep %.0f: ", i) + where};
  }
  return {true, "200 random sweeps, both alignments"};
}

Outcome parser_corpus() {
  int well_ok = 0, mal_ok = 0;
  const auto well = test_support::well_formed_answers();
  const auto mal = test_support::malformed_answers();
  for (const auto& a : well) {
    try {
      const auto parsed = parse_answer(a.text);
      if (parsed.parsed.at(ClassName::Wood).present == a.wood &&
          parsed.parsed.at(ClassName::Settlement).present == a.settlement)
        ++well_ok;
    } catch (const ParseError&) {
    }
  }
  for (const auto& text : mal) {
    try {
      parse_answer(text);
    } catch (const ParseError&) {
      ++mal_ok;
    }
  }
  return {well_ok == static_cast<int>(well.size()) && mal_ok == static_cast<int>(mal.size()),
          fmt("well-formed %.0f/%.0f, malformed rejected %.0f/", well_ok, well.size(), mal_ok) +
              std::to_string(mal.size())};
}

Outcome determinism() {
  const json doc = json::parse(R"({
    "seed": 11,
    "classes": ["wood"],
    "synth": {"sheets": 2, "size_px": 1920},
    "model": {"encoder_widths": [4, 8, 8, 16, 16, 16]},
    "train": {"epochs": 3, "warmup_epochs": 1, "checkpoint_every": 0}
  })");
  const auto cfg = parse_pipeline_config(doc);
  test_support::TempDir a, b;
  std::ostringstream sink;
  const auto ra = run_pipeline(cfg, a.path(), sink);
  const auto rb = run_pipeline(cfg, b.path(), sink);
  const auto ta = slurp(ra.report_csv), tb = slurp(rb.report_csv);
  return {!ta.empty() && ta == tb, ta.empty() ? "empty report" : (ta == tb ? "report.csv identical" : "report.csv differs")};
}

Outcome synthetic_end_to_end() {
  const json doc = json::parse(R"({
    "seed": 0,
    "classes": ["wood"],
    "synth": {"sheets": 4, "size_px": 1920},
    "model": {"encoder_widths": [8, 16, 16, 32, 32, 32], "drop_p": 0.2},
    "train": {"epochs": 100, "learning_rate": 5e-4, "warmup_epochs": 5, "checkpoint_every": 0},
    "evaluate": {"thresholds": "0.1:0.9:0.1"}
  })");
  const auto cfg = parse_pipeline_config(doc);
  test_support::TempDir work;
  std::ostringstream sink;
  const auto res = run_pipeline(cfg, work.path(), sink);
  const auto reports = read_report_csv(res.report_csv);
  for (const auto& r : reports) {
    if (r.mode != AlignMode::DownSampled || std::abs(r.threshold - 0.5) > 1e-9) continue;
    return {r.recall >= 0.90 && r.iou >= 0.70, fmt("down-sampled sigma 0.5: recall %.3f, IoU %.3f, precision %.3f",
                                                   r.recall, r.iou, r.precision)};
  }
  return {false, "no down-sampled report at sigma 0.5"};
}

}  // namespace

int main() {
  run("shape_contract", 5, shape_contract);  // encode itself must take < 1 s
  run("attention_normalization", 10, attention_normalization);
  run("drop_token_expectation", 30, drop_expectation);
  run("gradient_check", 60, gradient_check);
  run("extraction_coverage", 120, extraction_coverage);
  run("metric_oracle", 30, metric_oracle);
  run("threshold_monotonicity", 10, threshold_monotonicity);
  run("llm_parser_corpus", 5, parser_corpus);
  run("determinism", 300, determinism);
  run("synthetic_end_to_end", 3 * 3600, synthetic_end_to_end);
  return failures == 0 ? 0 : 1;
}
