#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "attn_distill/core.hpp"
#include "attn_distill/labels.hpp"
#include "attn_distill/tiler.hpp"

namespace attn_distill {

/// Append-only label history. Base records come from the labeler output
/// file; human corrections are appended to `<labels>.journal` and fsynced
/// before set_human returns. snapshot() folds the journal into the base file.
class LabelStore {
 public:
  explicit LabelStore(std::filesystem::path labels_file);

  std::vector<LabelRecord> history() const;
  std::vector<CoarseLabel> effective() const;
  std::optional<CoarseLabel> effective(const PatchId& patch, ClassName c) const;

  /// Records a human label. Returns the resulting effective label; a request
  /// that matches the current human label appends nothing.
  CoarseLabel set_human(const PatchId& patch, ClassName c, bool present);

  void snapshot();

  const std::filesystem::path& labels_file() const { return labels_file_; }
  std::filesystem::path journal_file() const;

 private:
  void append_journal(const LabelRecord& record);

  std::filesystem::path labels_file_;
  mutable std::shared_mutex mutex_;
  std::vector<LabelRecord> history_;
};

struct SheetStats {
  SheetId sheet;
  std::size_t patches = 0;
  std::size_t labels = 0;  // effective labels over all classes
  double coverage = 0.0;   // labels / (patches * classes)
  std::size_t human_overrides = 0;
};

struct PatchRecordView {
  PatchId patch;
  std::string image_url;
  std::optional<bool> label;
  std::optional<LabelSource> source;
  std::string reason;
  bool has_overlay = false;
};

struct PatchPage {
  SheetId sheet;
  ClassName class_name = ClassName::Wood;
  int page = 1;
  int page_size = 20;
  std::size_t total = 0;
  std::vector<PatchRecordView> items;
};

struct ReviewConfig {
  std::filesystem::path labels_file;
  std::filesystem::path patches_dir;
  std::filesystem::path attn_dir;  // optional, enables overlays
  std::filesystem::path ui_dir;    // optional static front-end
  std::string cors_origin = "*";
};

/// Transport-independent review logic behind the HTTP routes.
class ReviewService {
 public:
  explicit ReviewService(ReviewConfig config);

  std::vector<SheetStats> sheets() const;
  /// Throws NotFound for an unknown sheet, InvalidArgument for a bad page.
  PatchPage patches(const SheetId& sheet, ClassName c, int page, int page_size) const;
  /// Throws NotFound for an unknown patch.
  CoarseLabel set_label(const PatchId& patch, ClassName c, bool present);
  std::string export_labels() const;
  std::filesystem::path image_path(const PatchId& patch) const;
  /// PNG bytes of the attention overlay; nullopt when no map exists.
  std::optional<std::string> overlay_png(const PatchId& patch, ClassName c);

  bool has_patch(const PatchId& patch) const;
  const ReviewConfig& config() const { return config_; }
  LabelStore& store() { return store_; }

 private:
  ReviewConfig config_;
  LabelStore store_;
  std::vector<Manifest> manifests_;
  std::map<PatchId, ManifestEntry> entries_;
  std::mutex overlay_mutex_;
  std::map<std::pair<PatchId, ClassName>, std::string> overlay_cache_;
};

std::string to_json(const std::vector<SheetStats>& stats);
std::string to_json(const PatchPage& page);
std::string to_json(const CoarseLabel& label);

/// HTTP front of a ReviewService:
///   GET  /sheets
///   GET  /sheets/{sheet}/patches?class=&page=&page_size=
///   POST /patches/{patch_id}/labels/{class}   body {"present": bool}
///   GET  /export/labels
///   GET  /patches/{patch_id}/image
///   GET  /patches/{patch_id}/overlay?class=
///   GET  /colormap
class ReviewServer {
 public:
  explicit ReviewServer(ReviewConfig config);
  ~ReviewServer();
  ReviewServer(const ReviewServer&) = delete;
  ReviewServer& operator=(const ReviewServer&) = delete;

  /// Binds to host:port (port 0 picks a free port) and returns the port.
  int bind(const std::string& host, int port);
  /// Blocks until stop() is called.
  void listen();
  void stop();
  ReviewService& service();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace attn_distill
