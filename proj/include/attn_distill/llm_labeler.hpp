#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "attn_distill/core.hpp"
#include "attn_distill/image_io.hpp"
#include "attn_distill/labels.hpp"
#include "attn_distill/tiler.hpp"

namespace attn_distill {

inline constexpr int kLegendSeparatorPx = 16;

/// Question template sent with every composite image.
std::string prompt_template();

struct PromptBundle {
  Rgb8 composite;  // legend | separator | patch
  std::string prompt_text;
  PatchId patch;
};

/// Places the legend left of the patch with a gray separator column; the
/// shorter image is padded with white at the bottom.
PromptBundle build_prompt(const PatchId& patch, const Rgb8& patch_pixels, const Rgb8& legend);
PromptBundle build_prompt(const PatchImage& patch, const Rgb8& legend);

/// SHA-256 (hex) over the composite pixels, its dimensions and the text.
std::string bundle_hash(const PromptBundle& bundle);

struct ClassAnswer {
  bool present = false;
  std::string reason;

  bool operator==(const ClassAnswer&) const = default;
};

struct LlmAnswer {
  std::string raw_text;
  std::map<ClassName, ClassAnswer> parsed;
};

/// Extracts `**<Class>?** Yes|No : reason` per class, case-insensitively.
/// Throws ParseError when a class is missing or its answer is ambiguous.
LlmAnswer parse_answer(const std::string& raw_text);

/// Renders an answer in the requested structure (inverse of parse_answer).
std::string format_answer(const std::map<ClassName, ClassAnswer>& answers);

/// Transient provider failure (network, quota, server error).
struct ProviderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A vision-language model endpoint: composite image + question in, text out.
class LlmProvider {
 public:
  virtual ~LlmProvider() = default;
  virtual std::string name() const = 0;
  virtual std::string complete(const PromptBundle& bundle) = 0;
};

/// Answers from a callback; used for tests and fault injection.
class ScriptedProvider : public LlmProvider {
 public:
  using Script = std::function<std::string(const PromptBundle&)>;
  explicit ScriptedProvider(Script script) : script_(std::move(script)) {}
  std::string name() const override { return "scripted"; }
  std::string complete(const PromptBundle& bundle) override;
  int calls() const { return calls_.load(); }

 private:
  Script script_;
  std::atomic<int> calls_{0};
};

/// Offline stand-in for a real model: answers from ground-truth masks
/// (`{sheet}_{class}.png` in masks_dir). A class counts as present when at
/// least `min_fraction` of the patch pixels are foreground. `flip_rate`
/// flips answers deterministically per (patch, class) to imitate label noise.
class MaskOracleProvider : public LlmProvider {
 public:
  MaskOracleProvider(std::filesystem::path masks_dir, int tile_px = kPatchPx, double min_fraction = 0.0,
                     double flip_rate = 0.0, std::uint64_t seed = 0);
  std::string name() const override { return "mock"; }
  std::string complete(const PromptBundle& bundle) override;

 private:
  const GroundTruthMask& mask_for(const SheetId& sheet, ClassName c);

  std::filesystem::path masks_dir_;
  int tile_px_;
  double min_fraction_;
  double flip_rate_;
  std::uint64_t seed_;
  std::mutex mutex_;
  std::map<std::pair<SheetId, ClassName>, GroundTruthMask> masks_;
};

/// Never answers; with a warm cache no call is made.
class ReplayProvider : public LlmProvider {
 public:
  std::string name() const override { return "replay"; }
  std::string complete(const PromptBundle& bundle) override;
};

struct HttpProviderConfig {
  std::string base_url = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4o";
  std::string api_key_env = "OPENAI_API_KEY";
  int timeout_seconds = 120;
};

/// OpenAI-compatible chat-completions endpoint with an inline PNG image.
class HttpChatProvider : public LlmProvider {
 public:
  explicit HttpChatProvider(HttpProviderConfig config);
  std::string name() const override { return "openai"; }
  std::string complete(const PromptBundle& bundle) override;

  /// Request body for a bundle (exposed for tests).
  std::string request_body(const PromptBundle& bundle) const;

 private:
  HttpProviderConfig config_;
  std::string api_key_;
};

/// Raw responses keyed by bundle hash. Readers may run concurrently; writes
/// go to a temp file and are renamed into place.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir);
  std::optional<std::string> get(const std::string& key) const;
  void put(const std::string& key, const PatchId& patch, const std::string& provider, const std::string& response);
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  std::mutex write_mutex_;
};

struct LabelingOptions {
  int concurrency = 4;
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
};

struct LabelingResult {
  std::vector<LabelRecord> records;  // sorted by (patch, class)
  int provider_calls = 0;
  int cache_hits = 0;
  int unlabeled_patches = 0;
};

/// Labels every patch of the manifests. Responses are cached before parsing,
/// so cached patches are never sent again. Provider failures after the retry
/// budget and unparseable answers produce `unlabeled` records.
LabelingResult label_patches(const std::vector<Manifest>& manifests, const std::filesystem::path& patches_dir,
                             const Rgb8& legend, LlmProvider& provider, ResponseCache& cache,
                             const LabelingOptions& options = {});

std::string sha256_hex(const void* data, std::size_t size);
std::string base64_encode(const std::vector<std::uint8_t>& bytes);

}  // namespace attn_distill
