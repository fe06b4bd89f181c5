#include "attn_distill/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "attn_distill/colormap.hpp"
#include "attn_distill/errors.hpp"

namespace attn_distill {

namespace {

double ratio(std::size_t num, std::size_t den, bool both_empty) {
  if (den > 0) return static_cast<double>(num) / static_cast<double>(den);
  return both_empty ? 1.0 : 0.0;
}

bool both_empty(const ConfusionCounts& c) { return c.tp + c.fp == 0 && c.tp + c.fn == 0; }

BoolGrid crop(const BoolGrid& grid, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || y0 + h > grid.rows || x0 + w > grid.cols) {
    throw ValidationError("patch region lies outside the ground-truth mask");
  }
  BoolGrid out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out.set(y, x, grid.at(y0 + y, x0 + x));
  }
  return out;
}

std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

double iou_of(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp + c.fn, both_empty(c)); }
double precision_of(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp, both_empty(c)); }
double recall_of(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn, both_empty(c)); }

std::string_view to_string(AlignMode mode) {
  return mode == AlignMode::DownSampled ? "down_sampled" : "up_sampled";
}

BoolGrid downsample_gt(const BoolGrid& mask, int tile) {
  if (tile <= 0) throw InvalidArgument("tile size must be positive");
  if (mask.rows % tile != 0 || mask.cols % tile != 0) {
    throw ValidationError("mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                          " is not divisible into " + std::to_string(tile) + "px tiles");
  }
  BoolGrid out(mask.rows / tile, mask.cols / tile);
  for (int y = 0; y < mask.rows; ++y) {
    const int r = y / tile;
    for (int x = 0; x < mask.cols; ++x) {
      if (mask.at(y, x)) out.set(r, x / tile, true);
    }
  }
  return out;
}

ConfidenceRaster upsample_attention(const AttentionMap& map, int tile) {
  if (tile <= 0) throw InvalidArgument("tile size must be positive");
  ConfidenceRaster out{map.rows * tile, map.cols * tile, {}};
  out.values.resize(static_cast<std::size_t>(out.rows) * out.cols);
  for (int y = 0; y < out.rows; ++y) {
    for (int x = 0; x < out.cols; ++x) {
      out.values[static_cast<std::size_t>(y) * out.cols + x] = map.at(y / tile, x / tile);
    }
  }
  return out;
}

ConfidenceRaster as_raster(const AttentionMap& map) { return {map.rows, map.cols, map.weights}; }

BoolGrid binarize(const ConfidenceRaster& confidences, double sigma) {
  if (!(sigma > 0.0 && sigma < 1.0)) throw InvalidArgument("threshold must lie in (0,1)");
  BoolGrid out(confidences.rows, confidences.cols);
  for (std::size_t i = 0; i < confidences.values.size(); ++i) out.cells[i] = confidences.values[i] > sigma ? 1 : 0;
  return out;
}

ConfusionCounts confusion(const BoolGrid& pred, const BoolGrid& gt) {
  if (pred.rows != gt.rows || pred.cols != gt.cols) {
    throw ValidationError("prediction " + std::to_string(pred.rows) + "x" + std::to_string(pred.cols) +
                          " does not match ground truth " + std::to_string(gt.rows) + "x" + std::to_string(gt.cols));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.cells.size(); ++i) {
    const bool p = pred.cells[i] != 0;
    const bool g = gt.cells[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

EvalReport report_from_counts(const ConfusionCounts& counts) {
  EvalReport r;
  r.counts = counts;
  r.iou = iou_of(counts);
  r.precision = precision_of(counts);
  r.recall = recall_of(counts);
  return r;
}

EvalReport score(const BoolGrid& pred, const BoolGrid& gt) { return report_from_counts(confusion(pred, gt)); }

std::vector<double> parse_thresholds(const std::string& spec) {
  std::vector<double> out;
  try {
    if (spec.find(':') != std::string::npos) {
      std::stringstream ss(spec);
      std::string part;
      std::vector<double> fields;
      while (std::getline(ss, part, ':')) fields.push_back(std::stod(part));
      if (fields.size() != 3 || !(fields[2] > 0.0) || fields[1] < fields[0]) {
        throw InvalidArgument("threshold range must be lo:hi:step");
      }
      const auto n = static_cast<int>(std::floor((fields[1] - fields[0]) / fields[2] + 1e-9));
      for (int i = 0; i <= n; ++i) {
        // Round to 1e-9 so 0.1 + 2*0.1 prints as 0.3.
        out.push_back(std::round((fields[0] + i * fields[2]) * 1e9) / 1e9);
      }
    } else {
      std::stringstream ss(spec);
      std::string part;
      while (std::getline(ss, part, ',')) {
        if (!part.empty()) out.push_back(std::stod(part));
      }
    }
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const InvalidArgument*>(&e)) throw;
    throw InvalidArgument("bad threshold list: " + spec);
  }
  if (out.empty()) throw InvalidArgument("no thresholds given");
  for (double s : out) {
    if (!(s > 0.0 && s < 1.0)) throw InvalidArgument("threshold must lie in (0,1)");
  }
  return out;
}

std::vector<EvalReport> sweep(const std::vector<AttentionMap>& maps, const std::map<SheetId, GroundTruthMask>& masks,
                              ClassName class_name, const std::vector<double>& thresholds) {
  if (maps.empty()) throw InvalidArgument("sweep needs at least one attention map");
  if (thresholds.empty()) throw InvalidArgument("sweep needs at least one threshold");

  struct Aligned {
    ConfidenceRaster coarse;
    ConfidenceRaster fine;
    BoolGrid gt_coarse;
    BoolGrid gt_fine;
  };
  std::vector<Aligned> aligned;
  aligned.reserve(maps.size());
  for (const auto& map : maps) {
    if (map.class_name != class_name) continue;
    const auto it = masks.find(map.patch.sheet);
    if (it == masks.end()) throw ValidationError("no ground truth for sheet " + map.patch.sheet);
    const int h = map.rows * map.token_pixels;
    const int w = map.cols * map.token_pixels;
    auto fine_gt = crop(it->second.mask, map.patch.row * h, map.patch.col * w, h, w);
    auto coarse_gt = downsample_gt(fine_gt, map.token_pixels);
    aligned.push_back({as_raster(map), upsample_attention(map, map.token_pixels), std::move(coarse_gt),
                       std::move(fine_gt)});
  }
  if (aligned.empty()) throw InvalidArgument("no attention maps for class " + std::string(to_string(class_name)));

  std::vector<EvalReport> reports;
  for (AlignMode mode : {AlignMode::DownSampled, AlignMode::UpSampled}) {
    for (double sigma : thresholds) {
      ConfusionCounts total;
      for (const auto& a : aligned) {
        if (mode == AlignMode::DownSampled) {
          total += confusion(binarize(a.coarse, sigma), a.gt_coarse);
        } else {
          total += confusion(binarize(a.fine, sigma), a.gt_fine);
        }
      }
      auto r = report_from_counts(total);
      r.class_name = class_name;
      r.mode = mode;
      r.threshold = sigma;
      reports.push_back(r);
    }
  }
  return reports;
}

void write_report_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write report: " + path.string());
  out << "class,mode,threshold,iou,precision,recall,tp,fp,fn,tn\n";
  for (const auto& r : reports) {
    char sigma[16];
    std::snprintf(sigma, sizeof(sigma), "%.2f", r.threshold);
    out << to_string(r.class_name) << "," << to_string(r.mode) << "," << sigma << "," << format_metric(r.iou) << ","
        << format_metric(r.precision) << "," << format_metric(r.recall) << "," << r.counts.tp << "," << r.counts.fp
        << "," << r.counts.fn << "," << r.counts.tn << "\n";
  }
  if (!out) throw IoError("failed writing report: " + path.string());
}

std::vector<EvalReport> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read report: " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<EvalReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> f;
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw FormatError("bad report row: " + line);
    EvalReport r;
    r.class_name = parse_class_name(f[0]);
    r.mode = f[1] == "down_sampled" ? AlignMode::DownSampled : AlignMode::UpSampled;
    r.threshold = std::stod(f[2]);
    r.iou = std::stod(f[3]);
    r.precision = std::stod(f[4]);
    r.recall = std::stod(f[5]);
    r.counts = {std::stoul(f[6]), std::stoul(f[7]), std::stoul(f[8]), std::stoul(f[9])};
    out.push_back(r);
  }
  return out;
}

void plot_sweep(const std::filesystem::path& path, const std::vector<EvalReport>& reports, AlignMode mode) {
  constexpr int kW = 640, kH = 480, kLeft = 60, kRight = 20, kTop = 40, kBottom = 50;
  cv::Mat canvas(kH, kW, CV_8UC3, cv::Scalar(255, 255, 255));
  auto to_px = [&](double x, double y) {
    return cv::Point(kLeft + static_cast<int>(std::lround(x * (kW - kLeft - kRight))),
                     kH - kBottom - static_cast<int>(std::lround(y * (kH - kTop - kBottom))));
  };
  const cv::Scalar axis(0, 0, 0), grid(220, 220, 220);
  for (int i = 0; i <= 10; ++i) {
    const double t = i / 10.0;
    cv::line(canvas, to_px(t, 0), to_px(t, 1), grid, 1);
    cv::line(canvas, to_px(0, t), to_px(1, t), grid, 1);
    char label[8];
    std::snprintf(label, sizeof(label), "%.1f", t);
    cv::putText(canvas, label, to_px(t, 0) + cv::Point(-10, 18), cv::FONT_HERSHEY_SIMPLEX, 0.4, axis, 1);
    cv::putText(canvas, label, to_px(0, t) + cv::Point(-32, 4), cv::FONT_HERSHEY_SIMPLEX, 0.4, axis, 1);
  }
  cv::line(canvas, to_px(0, 0), to_px(1, 0), axis, 1);
  cv::line(canvas, to_px(0, 0), to_px(0, 1), axis, 1);
  cv::putText(canvas, "threshold", cv::Point(kW / 2 - 30, kH - 12), cv::FONT_HERSHEY_SIMPLEX, 0.5, axis, 1);
  const std::string title = std::string(to_string(mode)) + " IoU / precision / recall";
  cv::putText(canvas, title, cv::Point(kLeft, 25), cv::FONT_HERSHEY_SIMPLEX, 0.55, axis, 1);

  std::vector<EvalReport> rows;
  for (const auto& r : reports) {
    if (r.mode == mode) rows.push_back(r);
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.threshold < b.threshold; });
  struct Series {
    const char* name;
    cv::Scalar color;  // BGR
    double EvalReport::*field;
  };
  const Series series[] = {{"IoU", cv::Scalar(200, 80, 0), &EvalReport::iou},
                           {"precision", cv::Scalar(0, 150, 0), &EvalReport::precision},
                           {"recall", cv::Scalar(0, 0, 200), &EvalReport::recall}};
  int legend_y = kTop + 15;
  for (const auto& s : series) {
    std::vector<cv::Point> pts;
    for (const auto& r : rows) pts.push_back(to_px(r.threshold, r.*(s.field)));
    if (pts.size() > 1) cv::polylines(canvas, pts, false, s.color, 2, cv::LINE_AA);
    for (const auto& p : pts) cv::circle(canvas, p, 3, s.color, cv::FILLED, cv::LINE_AA);
    cv::line(canvas, cv::Point(kW - 140, legend_y - 4), cv::Point(kW - 115, legend_y - 4), s.color, 2);
    cv::putText(canvas, s.name, cv::Point(kW - 108, legend_y), cv::FONT_HERSHEY_SIMPLEX, 0.45, axis, 1);
    legend_y += 18;
  }
  if (!cv::imwrite(path.string(), canvas)) throw IoError("cannot write plot: " + path.string());
}

Rgb8 render_sheet_overlay(const Rgb8& sheet, const std::vector<AttentionMap>& maps, const BoolGrid* gt, double alpha) {
  const int w = sheet.width;
  const int h = sheet.height;
  const int out_w = gt ? 2 * w : w;
  Rgb8 out{h, out_w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * out_w * 3, 255)};
  auto px = [&](int y, int x) -> std::uint8_t* { return &out.pixels[(static_cast<std::size_t>(y) * out_w + x) * 3]; };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto* src = &sheet.pixels[(static_cast<std::size_t>(y) * w + x) * 3];
      std::copy(src, src + 3, px(y, x));
    }
  }
  for (const auto& map : maps) {
    const int ph = map.rows * map.token_pixels;
    const int pw = map.cols * map.token_pixels;
    const int y0 = map.patch.row * ph;
    const int x0 = map.patch.col * pw;
    for (int y = 0; y < ph && y0 + y < h; ++y) {
      for (int x = 0; x < pw && x0 + x < w; ++x) {
        auto* p = px(y0 + y, x0 + x);
        const Rgb c = blend({p[0], p[1], p[2]}, attention_color(map.at(y / map.token_pixels, x / map.token_pixels)),
                            alpha);
        std::copy(c.begin(), c.end(), p);
      }
    }
  }
  if (gt) {
    if (gt->rows != h || gt->cols != w) throw ValidationError("ground truth does not match sheet size");
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Rgb c = gt->at(y, x) ? Rgb{255, 0, 0} : Rgb{0, 0, 255};
        std::copy(c.begin(), c.end(), px(y, w + x));
      }
    }
  }
  return out;
}

}  // namespace attn_distill
