#include "attn_distill/labels.hpp"

#include <fstream>
#include <map>

#include <json.hpp>

#include "attn_distill/errors.hpp"

namespace attn_distill {

std::string to_json_line(const LabelRecord& r) {
  nlohmann::ordered_json j{{"patch_id", r.patch.str()}, {"class", to_string(r.class_name)}};
  j["present"] = r.present ? nlohmann::ordered_json(*r.present) : nlohmann::ordered_json(nullptr);
  j["source"] = to_string(r.source);
  j["reason"] = r.reason;
  if (r.unlabeled) {
    j["unlabeled"] = true;
    j["error"] = r.error;
  }
  return j.dump();
}

LabelRecord parse_label_line(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    LabelRecord r;
    r.patch = PatchId::parse(j.at("patch_id").get<std::string>());
    r.class_name = parse_class_name(j.at("class").get<std::string>());
    const auto& present = j.at("present");
    if (!present.is_null()) r.present = present.get<bool>();
    r.source = parse_label_source(j.value("source", "llm"));
    r.reason = j.value("reason", "");
    r.unlabeled = j.value("unlabeled", false);
    r.error = j.value("error", "");
    if (!r.unlabeled && !r.present) throw FormatError("label record without present value: " + line);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad label record: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("bad label record: ") + e.what());
  }
}

void write_labels(std::ostream& out, const std::vector<LabelRecord>& records) {
  for (const auto& r : records) out << to_json_line(r) << "\n";
}

void write_labels(const std::filesystem::path& path, const std::vector<LabelRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write labels: " + path.string());
  write_labels(out, records);
  if (!out) throw IoError("failed writing labels: " + path.string());
}

std::vector<LabelRecord> read_labels(std::istream& in) {
  std::vector<LabelRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_label_line(line));
  }
  return out;
}

std::vector<LabelRecord> read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read labels: " + path.string());
  return read_labels(in);
}

std::vector<CoarseLabel> effective_labels(const std::vector<LabelRecord>& records) {
  std::map<std::pair<PatchId, ClassName>, CoarseLabel> resolved;
  for (const auto& r : records) {
    if (r.unlabeled || !r.present) continue;
    const auto key = std::make_pair(r.patch, r.class_name);
    auto it = resolved.find(key);
    if (it != resolved.end() && it->second.source == LabelSource::Human && r.source == LabelSource::Llm) continue;
    CoarseLabel label{r.patch, r.class_name, *r.present, r.source,
                      r.reason.empty() ? std::nullopt : std::optional<std::string>(r.reason)};
    resolved.insert_or_assign(key, std::move(label));
  }
  std::vector<CoarseLabel> out;
  out.reserve(resolved.size());
  for (auto& [key, label] : resolved) out.push_back(std::move(label));
  return out;
}

LabelRecord to_record(const CoarseLabel& label) {
  LabelRecord r;
  r.patch = label.patch;
  r.class_name = label.class_name;
  r.present = label.present;
  r.source = label.source;
  r.reason = label.reason.value_or("");
  return r;
}

}  // namespace attn_distill
