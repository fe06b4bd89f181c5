#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "attn_distill/core.hpp"

namespace attn_distill {

/// One line of a label file: `{patch_id, class, present, source, reason}`.
/// Records the labeler could not produce carry `unlabeled = true` and a null
/// `present`.
struct LabelRecord {
  PatchId patch;
  ClassName class_name = ClassName::Wood;
  std::optional<bool> present;
  LabelSource source = LabelSource::Llm;
  std::string reason;
  bool unlabeled = false;
  std::string error;  // why the record is unlabeled

  bool operator==(const LabelRecord&) const = default;
};

std::string to_json_line(const LabelRecord& record);
LabelRecord parse_label_line(const std::string& line);

void write_labels(std::ostream& out, const std::vector<LabelRecord>& records);
void write_labels(const std::filesystem::path& path, const std::vector<LabelRecord>& records);
std::vector<LabelRecord> read_labels(std::istream& in);
std::vector<LabelRecord> read_labels(const std::filesystem::path& path);

/// Effective label per (patch, class): the latest human record wins over any
/// llm record; otherwise the latest llm record. Unlabeled records are ignored.
/// Output is sorted by (patch, class).
std::vector<CoarseLabel> effective_labels(const std::vector<LabelRecord>& records);

LabelRecord to_record(const CoarseLabel& label);

}  // namespace attn_distill
