#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "attn_distill/core.hpp"
#include "attn_distill/image_io.hpp"

namespace attn_distill {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

// Empty-denominator convention: 1.0 when both prediction and ground truth
// are empty, 0.0 when exactly one of them is.
double iou_of(const ConfusionCounts& c);
double precision_of(const ConfusionCounts& c);
double recall_of(const ConfusionCounts& c);

enum class AlignMode { DownSampled, UpSampled };

std::string_view to_string(AlignMode mode);

struct EvalReport {
  ClassName class_name = ClassName::Wood;
  AlignMode mode = AlignMode::DownSampled;
  double threshold = 0.5;
  double iou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  ConfusionCounts counts;
};

/// Real-valued raster (attention weights at token or pixel resolution).
struct ConfidenceRaster {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

/// A cell is foreground iff any pixel of its tile x tile block is.
BoolGrid downsample_gt(const BoolGrid& mask, int tile = kTokenPx);

/// Broadcasts each weight over its tile x tile pixel block.
ConfidenceRaster upsample_attention(const AttentionMap& map, int tile = kTokenPx);

ConfidenceRaster as_raster(const AttentionMap& map);

/// value > sigma is foreground; sigma must lie in (0,1).
BoolGrid binarize(const ConfidenceRaster& confidences, double sigma);

ConfusionCounts confusion(const BoolGrid& pred, const BoolGrid& gt);

/// Metrics from confusion counts; throws ValidationError on shape mismatch.
EvalReport score(const BoolGrid& pred, const BoolGrid& gt);
EvalReport report_from_counts(const ConfusionCounts& counts);

/// Parses "lo:hi:step" (inclusive) or a comma separated list.
std::vector<double> parse_thresholds(const std::string& spec);

/// One report per (mode, threshold), counts pooled over every map. Maps are
/// aligned with their sheet mask through the patch grid position.
std::vector<EvalReport> sweep(const std::vector<AttentionMap>& maps,
                              const std::map<SheetId, GroundTruthMask>& masks, ClassName class_name,
                              const std::vector<double>& thresholds);

void write_report_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports);
std::vector<EvalReport> read_report_csv(const std::filesystem::path& path);

/// Line plot of IoU / precision / recall against the threshold for one mode.
void plot_sweep(const std::filesystem::path& path, const std::vector<EvalReport>& reports, AlignMode mode);

/// Sheet overlay: attention colors blended over the raster on the left,
/// ground truth on the right.
Rgb8 render_sheet_overlay(const Rgb8& sheet, const std::vector<AttentionMap>& maps, const BoolGrid* gt,
                          double alpha = 0.5);

}  // namespace attn_distill
