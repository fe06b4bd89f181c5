#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "attn_distill/core.hpp"
#include "attn_distill/errors.hpp"
#include "attn_distill/evaluator.hpp"
#include "attn_distill/llm_labeler.hpp"
#include "attn_distill/synth.hpp"
#include "attn_distill/trainer.hpp"

namespace attn_distill {

inline constexpr const char* kToolVersion = "0.1.0";

/// Config rejected by the schema; `problems` lists every offending key.
struct SchemaError : ValidationError {
  SchemaError(std::vector<std::string> problems);
  std::vector<std::string> problems;
};

/// A stage threw; the message names the stage and its log file.
struct StageError : std::runtime_error {
  StageError(std::string stage, std::filesystem::path log, const std::string& cause);
  std::string stage;
  std::filesystem::path log;
};

struct SheetSource {
  SheetId sheet;
  std::filesystem::path raster;
  std::map<ClassName, std::filesystem::path> masks;
  bool eval = false;
};

struct LabelerSettings {
  std::string provider = "mock";  // mock | openai | replay
  double min_fraction = 0.0;      // mock: foreground share that counts as present
  double flip_rate = 0.0;         // mock: simulated label noise
  int concurrency = 4;
  int max_retries = 3;
  int backoff_ms = 500;
  HttpProviderConfig http;
  std::filesystem::path legend;   // empty: rendered from the synthetic textures
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::vector<ClassName> classes;
  int tile_px = kPatchPx;
  int token_px = kTokenPx;
  bool synth_enabled = true;
  int synth_sheets = 4;
  int synth_size_px = 1920;
  SynthTextures textures;
  std::vector<SheetSource> sheets;  // used when synth is disabled
  LabelerSettings labeler;
  TrainConfig train;
  std::string thresholds = "0.1:0.9:0.1";
  /// Canonical (defaults filled in) form, used for hashing and the manifest.
  nlohmann::ordered_json canonical;
};

/// Every key with its default value.
nlohmann::ordered_json default_pipeline_json();
/// Validates against the schema (unknown keys, types, ranges, required
/// `classes`) and fills in defaults. Throws SchemaError.
PipelineConfig parse_pipeline_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

nlohmann::ordered_json textures_to_json(const SynthTextures& t);
SynthTextures textures_from_json(const nlohmann::json& j);

struct StageOutcome {
  std::string stage;
  bool skipped = false;
  std::string input_hash;
  std::string output_digest;
  double seconds = 0.0;
  std::filesystem::path log;
};

struct PipelineResult {
  std::vector<StageOutcome> stages;
  std::filesystem::path report_csv;
  std::filesystem::path manifest;
};

/// Runs synth, tile, label, train, extract and evaluate into work_dir.
/// A stage is skipped when its input hash (config section plus the content
/// digests of its upstream outputs) matches the stamp left by the previous
/// run and its outputs are unchanged. Human corrections recorded by the
/// review server next to the label file feed the train stage.
PipelineResult run_pipeline(const PipelineConfig& config, const std::filesystem::path& work_dir,
                            std::ostream& progress);

/// Sweeps the maps of one class against `{sheet}_{class}.png` masks in
/// gt_dir and writes report.csv, sweep_down.png, sweep_up.png and
/// overlay_{sheet}.png into out_dir. Overlays are drawn over
/// `{sheet}.png` from rasters_dir when present, else over a white sheet.
std::vector<EvalReport> evaluate_to_dir(const std::filesystem::path& attn_dir, const std::filesystem::path& gt_dir,
                                        ClassName class_name, const std::vector<double>& thresholds,
                                        const std::filesystem::path& out_dir,
                                        const std::filesystem::path& rasters_dir = {});

/// SHA-256 over the relative paths and contents of every file under dir.
std::string directory_digest(const std::filesystem::path& dir);

/// Provider named by the settings; `masks_dir` backs the mock provider.
std::unique_ptr<LlmProvider> make_provider(const LabelerSettings& settings, const std::filesystem::path& masks_dir,
                                           std::uint64_t seed, int tile_px = kPatchPx);

}  // namespace attn_distill
